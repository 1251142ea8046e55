use std::path::Path;

use serde_json::json;

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::numerics::RngState;

use super::{init_params, ModelConfig, ModelParams};

const KIND: &str = "checkpoint";

/// Writes `params` and `cfg` as a tensor container. Values are stored as
/// 32-bit floats.
pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<()> {
    params.check_against(cfg)?;
    let tensors = params.tensors();
    write_container(
        path,
        KIND,
        json!({ "config": cfg }),
        tensors.iter().map(|(n, _, m)| (n.as_str(), *m)),
    )
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let (manifest, tensors) = read_container(path, KIND)?;
    let cfg: ModelConfig = serde_json::from_value(manifest.meta["config"].clone())?;
    cfg.validate()?;
    let mut params = init_params(&cfg, &mut RngState::new(0));
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(Error::Data(format!(
            "checkpoint {} holds {} tensors, config implies {}",
            path.display(),
            tensors.len(),
            names.len()
        )));
    }
    for ((expected, slot), (name, m)) in names.iter().zip(params.tensors_mut()).zip(tensors) {
        if *expected != name || slot.shape() != m.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor {name} {:?} does not match expected {expected} {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    Ok((params, cfg))
}

/// Loads a checkpoint and rejects it unless its architecture matches
/// `expected` (the seed is ignored).
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<(ModelParams, ModelConfig)> {
    let (params, cfg) = load_checkpoint(path)?;
    let arch = |c: &ModelConfig| ModelConfig { seed: 0, ..c.clone() };
    if arch(&cfg) != arch(expected) {
        return Err(Error::config(
            "model",
            format!("checkpoint {} has config {cfg:?}, expected {expected:?}", path.display()),
        ));
    }
    Ok((params, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            d_head: 4,
            vocab_size: 7,
            max_seq_len: 10,
            lora_rank: Some(2),
            seed: 9,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let p = init_params(&cfg, &mut RngState::new(4));
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&p, &cfg, &a).unwrap();
        let (loaded, lcfg) = load_checkpoint(&a).unwrap();
        assert_eq!(lcfg, cfg);
        for ((_, _, x), (_, _, y)) in p.tensors().iter().zip(loaded.tensors().iter()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!((*u as f32) as f64, *v);
            }
        }
        save_checkpoint(&loaded, &lcfg, &b).unwrap();
        for f in ["manifest.json", "tensors.bin"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
    }

    #[test]
    fn corrupted_blob_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let p = init_params(&cfg, &mut RngState::new(4));
        save_checkpoint(&p, &cfg, dir.path()).unwrap();
        let blob = dir.path().join("tensors.bin");
        let mut bytes = fs::read(&blob).unwrap();
        let n = bytes.len();
        bytes[n / 2] = bytes[n / 2].wrapping_add(1);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn expectation_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let p = init_params(&cfg, &mut RngState::new(4));
        save_checkpoint(&p, &cfg, dir.path()).unwrap();
        assert!(load_checkpoint_expecting(dir.path(), &cfg).is_ok());
        let other = ModelConfig { n_layers: 3, ..cfg };
        assert!(load_checkpoint_expecting(dir.path(), &other).is_err());
    }
}
