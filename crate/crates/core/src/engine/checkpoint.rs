//! Checkpoint archive: one safetensors file holding every parameter and
//! buffer as little-endian f32, keyed by module path. The header metadata
//! carries `format` (`tsccn-checkpoint`), `version` and `train_config`
//! (the run's [`TrainConfig`] as JSON), plus an optional `epoch`.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use tsccn_nn::Parameterized;

use super::TrainConfig;
use crate::network::Tsccn;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tsccn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {message}", path.display()))
}

pub fn save_checkpoint(path: &Path, model: &Tsccn, config: &TrainConfig, epoch: Option<usize>) -> Result<()> {
    if model.config() != &config.network || model.ablation() != config.ablation {
        return Err(err(path, "model does not match the configuration"));
    }
    let params = model.named_params();
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, p)| {
            let data = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), p.shape.clone(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.as_str(), v))
                .map_err(|e| err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        (
            "train_config".to_string(),
            serde_json::to_string(config).map_err(|e| err(path, e))?,
        ),
    ]);
    if let Some(e) = epoch {
        meta.insert("epoch".into(), e.to_string());
    }
    let buf = safetensors::serialize(views, Some(meta)).map_err(|e| err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model described by the stored configuration and fills in
/// its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(Tsccn, TrainConfig)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, metadata) = SafeTensors::read_metadata(&buf).map_err(|e| err(path, e))?;
    let meta = metadata.metadata().clone().unwrap_or_default();
    match meta.get("format") {
        Some(f) if f == CHECKPOINT_FORMAT => {}
        other => return Err(err(path, format!("not a checkpoint (format {other:?})"))),
    }
    let version = meta.get("version").and_then(|v| v.parse::<u32>().ok());
    if version != Some(CHECKPOINT_VERSION) {
        return Err(err(path, format!("unsupported version {version:?}")));
    }
    let config: TrainConfig = serde_json::from_str(meta.get("train_config").ok_or_else(|| err(path, "missing train_config"))?)
        .map_err(|e| err(path, e))?;
    let mut model = Tsccn::new(&config.network, config.ablation, 0)?;
    restore_parameters(&buf, &mut model).map_err(|m| err(path, m))?;
    Ok((model, config))
}

/// Copies stored tensors into `model`, which must have exactly the same
/// parameter names and shapes.
pub fn load_into(path: &Path, model: &mut Tsccn) -> Result<()> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore_parameters(&buf, model).map_err(|m| err(path, m))
}

fn restore_parameters(buf: &[u8], model: &mut Tsccn) -> std::result::Result<(), String> {
    let st = SafeTensors::deserialize(buf).map_err(|e| e.to_string())?;
    let mut params = model.named_params_mut();
    if st.len() != params.len() {
        return Err(format!("checkpoint has {} tensors, model has {}", st.len(), params.len()));
    }
    for (name, p) in params.iter_mut() {
        let t = st.tensor(name).map_err(|_| format!("missing tensor {name}"))?;
        if t.dtype() != Dtype::F32 || t.shape() != p.shape.as_slice() {
            return Err(format!(
                "tensor {name}: stored {:?} {:?}, expected F32 {:?}",
                t.dtype(),
                t.shape(),
                p.shape
            ));
        }
        for (v, b) in p.value.iter_mut().zip(t.data().chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Ablation, NetworkConfig};

    fn cfg(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            ablation,
            network: NetworkConfig {
                image_size: 16,
                base_width: 2,
                stem_kernel: 3,
                stem_stride: 1,
                ..NetworkConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let c = cfg(Ablation::FullTsccn);
        let model = Tsccn::new(&c.network, c.ablation, 11).unwrap();
        save_checkpoint(&path, &model, &c, Some(3)).unwrap();
        let (loaded, c2) = load_checkpoint(&path).unwrap();
        assert_eq!(c2, c);
        let a = model.named_params();
        let b = loaded.named_params();
        assert_eq!(a.len(), b.len());
        for ((na, pa), (nb, pb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let c = cfg(Ablation::FullTsccn);
        save_checkpoint(&path, &Tsccn::new(&c.network, c.ablation, 1).unwrap(), &c, None).unwrap();
        let other = cfg(Ablation::SingleStream);
        let mut small = Tsccn::new(&other.network, other.ablation, 1).unwrap();
        assert!(matches!(load_into(&path, &mut small), Err(Error::Checkpoint(_))));
        let mut wider_cfg = c.network.clone();
        wider_cfg.base_width = 4;
        let mut wider = Tsccn::new(&wider_cfg, c.ablation, 1).unwrap();
        assert!(matches!(load_into(&path, &mut wider), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
