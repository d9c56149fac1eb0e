//! Checkpoint directory layout:
//!
//! ```text
//! checkpoint.toml        model + optimizer config, step, dtype, parameter names
//! params/<name>.luna     one tensor file per named parameter
//! adam_m/<name>.luna     first-moment buffers
//! adam_v/<name>.luna     second-moment buffers
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, OptimConfig, OptimizerState};
use crate::error::{LunaError, Result};
use crate::numerics::{io, DType, Scalar, Tensor};

pub const CHECKPOINT_META: &str = "checkpoint.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    dtype: DType,
    params: Vec<String>,
    model: ModelConfig,
    optim: OptimConfig,
}

/// A restored model together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
}

fn tensor_path(dir: &Path, group: &str, name: &str) -> std::path::PathBuf {
    dir.join(group).join(format!("{name}.luna"))
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, model: &Model<T>, optimizer: &OptimizerState<T>) -> Result<()> {
    optimizer.check_shapes(model.store())?;
    for group in ["params", "adam_m", "adam_v"] {
        let sub = dir.join(group);
        fs::create_dir_all(&sub).map_err(|e| LunaError::io(&sub, e))?;
    }
    let mut names = Vec::with_capacity(model.store().len());
    for (k, (_, name, t)) in model.store().iter().enumerate() {
        io::save(&tensor_path(dir, "params", name), t)?;
        io::save(&tensor_path(dir, "adam_m", name), &optimizer.m[k])?;
        io::save(&tensor_path(dir, "adam_v", name), &optimizer.v[k])?;
        names.push(name.to_string());
    }
    let meta = Meta {
        step: optimizer.step,
        dtype: T::DTYPE,
        params: names,
        model: model.config().clone(),
        optim: optimizer.config.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| LunaError::Format(e.to_string()))?;
    let path = dir.join(CHECKPOINT_META);
    fs::write(&path, text).map_err(|e| LunaError::io(&path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let path = dir.join(CHECKPOINT_META);
    let text = fs::read_to_string(&path).map_err(|e| LunaError::io(&path, e))?;
    let meta: Meta = toml::from_str(&text).map_err(|e| LunaError::Format(format!("{}: {e}", path.display())))?;
    if meta.dtype != T::DTYPE {
        return Err(LunaError::Format(format!(
            "checkpoint holds {} tensors, requested {}",
            meta.dtype,
            T::DTYPE
        )));
    }
    let mut model = Model::<T>::new(meta.model)?;
    let expected: Vec<String> = model.store().iter().map(|(_, n, _)| n.to_string()).collect();
    if expected != meta.params {
        return Err(LunaError::Format("checkpoint parameter list does not match its model config".into()));
    }
    let mut optimizer = OptimizerState::new(meta.optim, model.store())?;
    optimizer.step = meta.step;
    let ids: Vec<_> = model.store().ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.store().name(id).to_string();
        let value: Tensor<T> = io::load(&tensor_path(dir, "params", &name))?;
        model.store_mut().set(id, value)?;
        optimizer.m[k] = io::load(&tensor_path(dir, "adam_m", &name))?;
        optimizer.v[k] = io::load(&tensor_path(dir, "adam_v", &name))?;
    }
    optimizer.check_shapes(model.store())?;
    Ok(Checkpoint { model, optimizer })
}
