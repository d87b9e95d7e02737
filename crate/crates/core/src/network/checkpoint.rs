//! Checkpoint file: `{"format_version": 1, "config": {...}, "params": {"<layer>/<block>": [[...]]}}`.
//! Matrices are nested row-major arrays; biases are `n x 1`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    params: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Model {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .blocks()
                .into_iter()
                .map(|(name, m)| (name, m.to_rows()))
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("parse error: {e}")))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format_version {} unsupported, expected {}",
                file.format_version, FORMAT_VERSION
            )));
        }
        file.config.validate()?;
        let mut params = Params::zeros(&file.config);
        let mut stored = file.params;
        for (name, block) in params.blocks_mut() {
            let rows = stored
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
            let m = Matrix::from_rows(&rows)
                .map_err(|_| Error::Checkpoint(format!("{name}: ragged rows")))?;
            if m.shape() != block.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match config shape {:?}",
                    m.shape(),
                    block.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite values")));
            }
            *block = m;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected block {extra}")));
        }
        Ok(Model {
            config: file.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads and checks that the stored architecture equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Model> {
        let model = Model::load(path)?;
        let want = Params::zeros(expected);
        for ((name, have), (_, want)) in model.params.blocks().iter().zip(want.blocks()) {
            if have.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, config expects {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        if model.config != *expected {
            return Err(Error::Checkpoint(
                "checkpoint config differs from the expected model config".into(),
            ));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::init(&tiny_config(), &mut Rng::new(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        for ((_, a), (_, b)) in model.params.blocks().iter().zip(back.params.blocks()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back, model);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = Model::init(&tiny_config(), &mut Rng::new(3)).unwrap();
        let text = model.to_json();
        let err = Model::from_json(&text[..text.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = Model::init(&tiny_config(), &mut Rng::new(3)).unwrap();
        let text = model.to_json().replace("\"format_version\":1", "\"format_version\":2");
        let err = Model::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("format_version 2"), "{err}");
    }

    #[test]
    fn params_from_another_config_name_the_layer() {
        let model = Model::init(&tiny_config(), &mut Rng::new(3)).unwrap();
        // Same params, but the config claims a wider first LSTM.
        let mut value: serde_json::Value = serde_json::from_str(&model.to_json()).unwrap();
        value["config"]["layer_sizes"][0] = serde_json::json!(4);
        let err = Model::from_json(&value.to_string()).unwrap_err().to_string();
        assert!(err.contains("lstm1/"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let mut other = tiny_config();
        other.layer_sizes[4] = 5;
        let err = Model::load_expecting(&path, &other).unwrap_err().to_string();
        assert!(err.contains("shared2/w"), "{err}");
    }
}
