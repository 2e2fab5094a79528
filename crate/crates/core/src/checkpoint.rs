//! Checkpoint serialization: a JSON manifest describing every tensor plus a
//! single binary payload of little-endian 32-bit floats. Emulated bf16 and
//! fp32 values embed exactly in the payload, so round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model, ModelConfig, Parameter};
use crate::optim::OptimizerState;
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub layer_kind: LayerKind,
    pub rows: usize,
    pub cols: usize,
    pub format: String,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model_cfg: ModelConfig,
    pub optimizer_step: Option<u64>,
    pub records: Vec<TensorRecord>,
}

const VERSION: u32 = 1;
const FORMAT_TAG: &str = "f32le";

fn push_tensor(
    records: &mut Vec<TensorRecord>,
    payload: &mut Vec<u8>,
    name: String,
    layer_kind: LayerKind,
    values: &Matrix,
) {
    let offset = payload.len() as u64;
    for &v in &values.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    records.push(TensorRecord {
        name,
        layer_kind,
        rows: values.rows,
        cols: values.cols,
        format: FORMAT_TAG.into(),
        offset,
        byte_len: payload.len() as u64 - offset,
    });
}

/// Writes `manifest.json` and `tensors.bin` into `dir`, creating it if
/// needed. Optimizer moments and master weights (when present) are stored
/// under `optim.*` names; init snapshots under `snapshot.*`.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    state: Option<&OptimizerState>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut payload = Vec::new();
    for p in &model.params {
        push_tensor(&mut records, &mut payload, p.name.clone(), p.layer_kind, &p.values);
        if let Some(snap) = &p.init_snapshot {
            push_tensor(
                &mut records,
                &mut payload,
                format!("snapshot.{}", p.name),
                p.layer_kind,
                snap,
            );
        }
    }
    if let Some(state) = state {
        for (p, m) in model.params.iter().zip(&state.m) {
            push_tensor(&mut records, &mut payload, format!("optim.m.{}", p.name), p.layer_kind, m);
        }
        for (p, v) in model.params.iter().zip(&state.v) {
            push_tensor(&mut records, &mut payload, format!("optim.v.{}", p.name), p.layer_kind, v);
        }
        if let Some(master) = &state.master {
            for (p, w) in model.params.iter().zip(master) {
                push_tensor(
                    &mut records,
                    &mut payload,
                    format!("optim.master.{}", p.name),
                    p.layer_kind,
                    w,
                );
            }
        }
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        model_cfg: model.cfg,
        optimizer_step: state.map(|s| s.step),
        records,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(PAYLOAD_FILE), payload)?;
    Ok(())
}

fn read_tensor(rec: &TensorRecord, payload: &[u8]) -> Result<Matrix> {
    if rec.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unknown tensor format {:?} for {}",
            rec.format, rec.name
        )));
    }
    let start = rec.offset as usize;
    let end = start + rec.byte_len as usize;
    if end > payload.len() || rec.byte_len as usize != rec.rows * rec.cols * 4 {
        return Err(Error::Checkpoint(format!("payload bounds mismatch for {}", rec.name)));
    }
    let data = payload[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Matrix {
        rows: rec.rows,
        cols: rec.cols,
        data,
    })
}

/// Reads a checkpoint back; the model's parameter order is the manifest's
/// record order, which `save_checkpoint` keeps canonical.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Option<OptimizerState>)> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    manifest.model_cfg.validate()?;
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;

    let mut params: Vec<Parameter> = Vec::new();
    for rec in &manifest.records {
        if rec.name.starts_with("optim.") {
            continue;
        }
        if let Some(base) = rec.name.strip_prefix("snapshot.") {
            let p = params
                .iter_mut()
                .find(|p| p.name == base)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot without parameter: {base}")))?;
            p.init_snapshot = Some(read_tensor(rec, &payload)?);
            continue;
        }
        params.push(Parameter {
            name: rec.name.clone(),
            layer_kind: rec.layer_kind,
            values: read_tensor(rec, &payload)?,
            init_snapshot: None,
        });
    }
    let model = Model {
        cfg: manifest.model_cfg,
        params,
    };

    let state = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let grab = |prefix: &str| -> Result<Vec<Matrix>> {
                model
                    .params
                    .iter()
                    .map(|p| {
                        let name = format!("{prefix}{}", p.name);
                        let rec = manifest
                            .records
                            .iter()
                            .find(|r| r.name == name)
                            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                        read_tensor(rec, &payload)
                    })
                    .collect()
            };
            let master = if manifest.records.iter().any(|r| r.name.starts_with("optim.master.")) {
                Some(grab("optim.master.")?)
            } else {
                None
            };
            Some(OptimizerState {
                m: grab("optim.m.")?,
                v: grab("optim.v.")?,
                master,
                step,
            })
        }
    };
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::numerics::BF16;
    use crate::precision::PrecisionPolicy;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            d_model: 8,
            n_layers: 2,
            d_ff: 16,
            n_heads: 1,
            context_length: 8,
            rmsnorm_eps: 1e-6,
        }
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.data.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = init_model(&tiny_cfg(), 7, BF16).unwrap();
        model.snapshot_init();
        save_checkpoint(dir.path(), &model, None).unwrap();
        let (loaded, state) = load_checkpoint(dir.path()).unwrap();
        assert!(state.is_none());
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.layer_kind, b.layer_kind);
            assert_eq!(bits(&a.values), bits(&b.values));
            assert_eq!(
                bits(a.init_snapshot.as_ref().unwrap()),
                bits(b.init_snapshot.as_ref().unwrap())
            );
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = init_model(&tiny_cfg(), 7, BF16).unwrap();
        let policy = PrecisionPolicy::mixed_bf16();
        let mut state = OptimizerState::new(&model, &policy);
        state.step = 42;
        state.m[0].data[0] = 0.125;
        state.v[3].data[1] = 0.25;
        save_checkpoint(dir.path(), &model, Some(&state)).unwrap();
        let (_, loaded) = load_checkpoint(dir.path()).unwrap();
        let loaded = loaded.unwrap();
        assert_eq!(loaded.step, 42);
        for (a, b) in state.m.iter().zip(&loaded.m) {
            assert_eq!(bits(a), bits(b));
        }
        for (a, b) in state.v.iter().zip(&loaded.v) {
            assert_eq!(bits(a), bits(b));
        }
        let (ma, mb) = (state.master.unwrap(), loaded.master.unwrap());
        for (a, b) in ma.iter().zip(&mb) {
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn pure_state_has_no_master_after_reload() {
        let dir = tempfile::tempdir().unwrap();
        let model = init_model(&tiny_cfg(), 3, BF16).unwrap();
        let state = OptimizerState::new(&model, &PrecisionPolicy::pure_bf16());
        save_checkpoint(dir.path(), &model, Some(&state)).unwrap();
        let (_, loaded) = load_checkpoint(dir.path()).unwrap();
        assert!(loaded.unwrap().master.is_none());
    }

    #[test]
    fn corrupt_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = init_model(&tiny_cfg(), 7, BF16).unwrap();
        save_checkpoint(dir.path(), &model, None).unwrap();
        let payload = std::fs::read(dir.path().join(PAYLOAD_FILE)).unwrap();
        std::fs::write(dir.path().join(PAYLOAD_FILE), &payload[..payload.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
