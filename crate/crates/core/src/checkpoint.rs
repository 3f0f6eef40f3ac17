//! Binary checkpoints: a little-endian f64 blob plus a JSON manifest at
//! `{path}.manifest.json` describing every tensor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mta::Stage;
use crate::params::{InitRecord, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
    pub init: InitRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub stage: Stage,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn save(path: &Path, model: &Model, step: usize) -> Result<Manifest> {
    let mut blob = Vec::with_capacity(model.num_params() * 8);
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, p) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            dtype: DTYPE.to_string(),
            offset: blob.len(),
            trainable: p.trainable,
            init: p.init.clone(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        stage: model.stage(),
        step,
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(path)?;
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for t in &manifest.tensors {
        if t.dtype != DTYPE {
            return Err(Error::Checkpoint(format!("tensor {} has dtype {}", t.name, t.dtype)));
        }
        if t.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {} at unexpected offset {}",
                t.name, t.offset
            )));
        }
        let n: usize = t.shape.iter().product();
        let end = t.offset + n * 8;
        let bytes = blob
            .get(t.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("blob truncated inside tensor {}", t.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
            .collect();
        store.insert(&t.name, Tensor::new(t.shape.clone(), data)?, t.init.clone())?;
        store.set_trainable(&t.name, t.trainable)?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset
        )));
    }
    let model = Model::from_parts(manifest.config.clone(), store, manifest.stage)?;
    Ok((model, manifest))
}

/// Loads a checkpoint and checks that it was written for `config`.
pub fn load_expecting(path: &Path, config: &ModelConfig) -> Result<(Model, Manifest)> {
    let (model, manifest) = load(path)?;
    if &manifest.config != config {
        return Err(Error::Checkpoint(format!(
            "{} was saved with a different model configuration",
            path.display()
        )));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::build(tiny(), 7).unwrap();
        m.promote_to_stage2(3).unwrap();
        m.params_mut().set_trainable("embed.tokens", false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/stage2.ckpt");
        save(&path, &m, 42).unwrap();
        let (back, manifest) = load_expecting(&path, &tiny()).unwrap();
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.stage, Stage::Two);
        assert!(back.params().bit_eq(m.params()));
        assert_eq!(back.stage(), Stage::Two);
        assert!(!back.params().get("embed.tokens").unwrap().trainable);
        for (name, p) in m.params().iter() {
            assert_eq!(back.params().get(name).unwrap().init, p.init);
        }
    }

    #[test]
    fn special_values_survive() {
        let mut m = Model::build(tiny(), 0).unwrap();
        let mut t = m.params().value("enc.0.ln1.b").unwrap().clone();
        t.data_mut()[0] = -0.0;
        t.data_mut()[1] = f64::MIN_POSITIVE / 2.0;
        t.data_mut()[2] = f64::MAX;
        m.params_mut().set_value("enc.0.ln1.b", t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, &m, 0).unwrap();
        assert!(load(&path).unwrap().0.params().bit_eq(m.params()));
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let m = Model::build(tiny(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, &m, 0).unwrap();
        let other = ModelConfig {
            dropout_rate: 0.1,
            ..tiny()
        };
        assert!(matches!(load_expecting(&path, &other), Err(Error::Checkpoint(_))));
        let mut blob = fs::read(&path).unwrap();
        blob.truncate(blob.len() - 4);
        fs::write(&path, blob).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load(&dir.path().join("none.ckpt")),
            Err(Error::MissingFile(_))
        ));
    }
}
