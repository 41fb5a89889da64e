//! Checkpoint directories: `manifest.json` + one FMAT file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::fmat::{read_fmat, write_fmat};
use crate::model::{ModelSpec, ModelState, Moments, PARAMETER_NAMES};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub step_count: u64,
    pub config_hash: String,
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

/// Outcome of a successful load.
#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub state: ModelState,
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

fn tensor_names() -> Vec<String> {
    let mut names: Vec<String> = PARAMETER_NAMES.iter().map(|s| s.to_string()).collect();
    for prefix in ["adam.m", "adam.v"] {
        names.extend(PARAMETER_NAMES.iter().map(|n| format!("{prefix}.{n}")));
    }
    names
}

/// Writes every parameter and both Adam moments, plus an optional copy of the experiment config.
pub fn save_checkpoint(dir: &Path, state: &ModelState, config_hash: &str, config_toml: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let params = state.parameters();
    let all = params
        .iter()
        .map(|(_, p)| *p)
        .chain(state.moments.iter().map(|m| &m.m))
        .chain(state.moments.iter().map(|m| &m.v));
    for (name, m) in tensor_names().into_iter().zip(all) {
        let file = format!("{name}.fmat");
        write_fmat(&dir.join(&file), m)?;
        tensors.push(TensorEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: 1,
        step_count: state.step_count,
        config_hash: config_hash.to_string(),
        model: state.spec,
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if let Some(cfg) = config_toml {
        let path = dir.join(CONFIG_COPY);
        fs::write(&path, cfg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Rebuilds a state from `dir`. A config-hash mismatch is reported as a warning, not an error.
pub fn load_checkpoint(dir: &Path, expected_config_hash: Option<&str>) -> Result<LoadedCheckpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if manifest.format_version != 1 {
        return Err(Error::Config(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    let mut state = ModelState::new(manifest.model, 0)?;
    let expected_shapes: Vec<(usize, usize)> = state.parameters().iter().map(|(_, p)| p.shape()).collect();

    let mut loaded = Vec::with_capacity(manifest.tensors.len());
    for name in tensor_names() {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Tensor {
                tensor: name.clone(),
                message: "missing from manifest".into(),
            })?;
        let base = name
            .strip_prefix("adam.m.")
            .or_else(|| name.strip_prefix("adam.v."))
            .unwrap_or(&name);
        let idx = PARAMETER_NAMES.iter().position(|n| *n == base).expect("known tensor");
        let expected = expected_shapes[idx];
        if (entry.rows, entry.cols) != expected {
            return Err(Error::Tensor {
                tensor: name,
                message: format!("manifest shape {}x{} does not match model {:?}", entry.rows, entry.cols, expected),
            });
        }
        let m = read_fmat(&dir.join(&entry.file)).map_err(|e| Error::Tensor {
            tensor: name.clone(),
            message: e.to_string(),
        })?;
        if m.shape() != expected {
            return Err(Error::Tensor {
                tensor: name,
                message: format!("file shape {:?} does not match manifest {:?}", m.shape(), expected),
            });
        }
        loaded.push(m);
    }

    let n = PARAMETER_NAMES.len();
    let mut it = loaded.into_iter();
    for name in PARAMETER_NAMES {
        state.set_parameter(name, it.next().expect("parameter tensor"))?;
    }
    let ms: Vec<_> = it.by_ref().take(n).collect();
    let vs: Vec<_> = it.collect();
    let moments = ms.into_iter().zip(vs).map(|(m, v)| Moments { m, v }).collect();
    state.restore_optimizer(moments, manifest.step_count);

    let mut warnings = Vec::new();
    if let Some(expected) = expected_config_hash {
        if expected != manifest.config_hash {
            warnings.push(format!(
                "config hash mismatch: checkpoint {} vs current {expected}",
                manifest.config_hash
            ));
        }
    }
    Ok(LoadedCheckpoint {
        state,
        manifest,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdamConfig, ForwardConfig};
    use crate::numerics::{Matrix, RngState};
    use crate::harness::fmat::write_fmat;

    fn spec() -> ModelSpec {
        ModelSpec {
            audio_dim: 4,
            visual_dim: 3,
            channels: 5,
            hidden: 6,
            vocab_size: 7,
            audio_tokens: 3,
            visual_tokens: 3,
            caption_len: 3,
        }
    }

    fn trained_state() -> ModelState {
        let mut state = ModelState::new(spec(), 4).unwrap();
        let mut rng = RngState::new(5);
        let (x_a, x_v) = (rng.normal_matrix(3, 4), rng.normal_matrix(3, 3));
        let cfg = ForwardConfig::default();
        for _ in 0..3 {
            let cache = state.forward(&x_a, &x_v, &[1, 2, 3], &cfg).unwrap();
            state.backward(&cache).unwrap();
            state.adamw_step(1e-2, &AdamConfig::default());
        }
        state
    }

    #[test]
    fn save_load_forward_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let state = trained_state();
        save_checkpoint(dir.path(), &state, "abc", None).unwrap();
        let loaded = load_checkpoint(dir.path(), Some("abc")).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.state.step_count, 3);
        assert_eq!(loaded.state.moments, state.moments);
        let mut rng = RngState::new(77);
        let (x_a, x_v) = (rng.normal_matrix(3, 4), rng.normal_matrix(3, 3));
        let cfg = ForwardConfig::default();
        let a = state.forward(&x_a, &x_v, &[0, 6, 2], &cfg).unwrap();
        let b = loaded.state.forward(&x_a, &x_v, &[0, 6, 2], &cfg).unwrap();
        assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
        assert_eq!(a.logits(), b.logits());
    }

    #[test]
    fn tampered_shape_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trained_state(), "abc", None).unwrap();
        write_fmat(&dir.path().join("projector.w.fmat"), &Matrix::zeros(2, 2)).unwrap();
        let err = load_checkpoint(dir.path(), None).unwrap_err();
        assert!(matches!(&err, Error::Tensor { tensor, .. } if tensor == "projector.w"), "{err}");
    }

    #[test]
    fn hash_mismatch_warns_but_loads() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trained_state(), "abc", Some("seed = 1\n")).unwrap();
        let loaded = load_checkpoint(dir.path(), Some("def")).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!(dir.path().join(CONFIG_COPY).exists());
    }
}
