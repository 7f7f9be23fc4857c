//! Checkpoint persistence: a directory holding a `manifest.txt` (format tag,
//! model configuration as key=value text, and the tensor inventory) plus one
//! `.ten` file per parameter and batch-norm statistic. Loading rebuilds the
//! model from the stored configuration and refuses a caller configuration
//! that disagrees with it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::tensor::{Shape, Tensor};

const FORMAT: &str = "casinet-checkpoint-v1";

fn buffer_tensor(values: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(Shape::new(1, values.len(), 1, 1)?, values.to_vec())
}

/// Every named tensor of the model: parameters plus batch-norm running
/// statistics.
fn named_tensors(model: &SegModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for p in model.params() {
        let p = p.borrow();
        out.push((p.name.clone(), p.value.clone()));
    }
    for (prefix, bn) in model.bn_layers() {
        out.push((
            format!("{prefix}.running_mean"),
            buffer_tensor(&bn.running_mean.borrow()).expect("nonempty stats"),
        ));
        out.push((
            format!("{prefix}.running_var"),
            buffer_tensor(&bn.running_var.borrow()).expect("nonempty stats"),
        ));
    }
    out
}

pub fn save_checkpoint<P: AsRef<Path>>(dir: P, model: &SegModel) -> Result<()> {
    let dir = dir.as_ref();
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir)?;

    let tensors = named_tensors(model);
    let mut manifest = String::new();
    manifest.push_str(&format!("format={FORMAT}\n"));
    for (k, v) in model.cfg.to_kv() {
        manifest.push_str(&format!("model.{k}={v}\n"));
    }
    for (name, t) in &tensors {
        t.save(params_dir.join(format!("{name}.ten")))?;
        manifest.push_str(&format!("tensor={name}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// The model configuration stored in a checkpoint.
pub fn read_checkpoint_config<P: AsRef<Path>>(dir: P) -> Result<ModelConfig> {
    let (cfg, _) = read_manifest(dir.as_ref())?;
    Ok(cfg)
}

fn read_manifest(dir: &Path) -> Result<(ModelConfig, Vec<String>)> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|_| Error::CheckpointMismatch(format!("{} has no manifest.txt", dir.display())))?;
    let mut cfg = ModelConfig::default();
    let mut tensors = Vec::new();
    let mut format_ok = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::CheckpointMismatch(format!("bad manifest line: {line}")))?;
        if key == "format" {
            if value != FORMAT {
                return Err(Error::CheckpointMismatch(format!("unsupported format {value}")));
            }
            format_ok = true;
        } else if let Some(model_key) = key.strip_prefix("model.") {
            if !cfg.apply_kv(model_key, value)? {
                return Err(Error::CheckpointMismatch(format!("unknown model key {model_key}")));
            }
        } else if key == "tensor" {
            tensors.push(value.to_string());
        } else {
            return Err(Error::CheckpointMismatch(format!("unknown manifest key {key}")));
        }
    }
    if !format_ok {
        return Err(Error::CheckpointMismatch("manifest missing format tag".into()));
    }
    cfg.validate()?;
    Ok((cfg, tensors))
}

/// Load a checkpoint, verifying that the stored model configuration agrees
/// with `expected` key for key.
pub fn load_checkpoint<P: AsRef<Path>>(dir: P, expected: &ModelConfig) -> Result<SegModel> {
    let dir = dir.as_ref();
    let (stored, manifest_tensors) = read_manifest(dir)?;

    let stored_kv: BTreeMap<String, String> = stored.to_kv().into_iter().collect();
    let expected_kv: BTreeMap<String, String> = expected.to_kv().into_iter().collect();
    let diffs: Vec<String> = expected_kv
        .iter()
        .filter(|(k, v)| stored_kv.get(*k) != Some(v))
        .map(|(k, v)| {
            format!("{k}: requested {v}, checkpoint has {}", stored_kv.get(k).unwrap())
        })
        .collect();
    if !diffs.is_empty() {
        return Err(Error::CheckpointMismatch(diffs.join("; ")));
    }

    let model = SegModel::new(&stored, 0)?;
    let params_dir = dir.join("params");
    let mut expected_names: BTreeMap<String, ()> = BTreeMap::new();
    for p in model.params() {
        expected_names.insert(p.borrow().name.clone(), ());
    }
    for (prefix, _) in model.bn_layers() {
        expected_names.insert(format!("{prefix}.running_mean"), ());
        expected_names.insert(format!("{prefix}.running_var"), ());
    }
    let manifest_set: BTreeMap<String, ()> =
        manifest_tensors.iter().map(|n| (n.clone(), ())).collect();
    if manifest_set != expected_names {
        return Err(Error::CheckpointMismatch(
            "manifest tensor inventory does not match the model".into(),
        ));
    }

    for p in model.params() {
        let name = p.borrow().name.clone();
        let t = Tensor::load(params_dir.join(format!("{name}.ten")))?;
        if t.shape() != p.borrow().value.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name} has shape {}, model expects {}",
                t.shape(),
                p.borrow().value.shape()
            )));
        }
        p.borrow_mut().value = t;
    }
    for (prefix, bn) in model.bn_layers() {
        for (suffix, slot) in
            [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)]
        {
            let t = Tensor::load(params_dir.join(format!("{prefix}.{suffix}.ten")))?;
            if t.numel() != slot.borrow().len() {
                return Err(Error::CheckpointMismatch(format!(
                    "statistic {prefix}.{suffix} has {} entries, model expects {}",
                    t.numel(),
                    slot.borrow().len()
                )));
            }
            slot.borrow_mut().copy_from_slice(t.data());
        }
    }
    Ok(model)
}
