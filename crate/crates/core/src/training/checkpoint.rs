//! Checkpoint directories: parameters, optimizer state and a config echo.

use std::path::Path;

use crate::config::{KeyValues, ModelConfig, Scenario};
use crate::error::{Result, VnscError};
use crate::model::Model;

use super::{OptimizerState, TrainConfig};

pub const PARAMS_FILE: &str = "model.vnscparm";
pub const OPTIMIZER_FILE: &str = "optimizer.vnscopts";
pub const CONFIG_FILE: &str = "config.txt";

pub fn save_checkpoint(dir: &Path, model: &Model, opt: &OptimizerState, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.save(&dir.join(PARAMS_FILE))?;
    opt.save(&dir.join(OPTIMIZER_FILE))?;
    let mut kv = model.cfg.to_kv();
    kv.extend(&cfg.to_kv());
    std::fs::write(dir.join(CONFIG_FILE), kv.to_string())?;
    Ok(())
}

/// Model and training configuration from a config echo or a config file.
/// Keys override the architecture named by `preset` (`standard`, the
/// default, or `miniature`).
pub fn configs_from_kv(kv: &KeyValues) -> Result<(ModelConfig, TrainConfig)> {
    let known_model = ModelConfig::standard(Scenario::Va).to_kv();
    let known_train = TrainConfig::for_scenario(Scenario::Va).to_kv();
    if let Some(key) = kv.keys().find(|k| {
        !matches!(*k, "scenario" | "preset") && known_model.get(k).is_none() && known_train.get(k).is_none()
    }) {
        return Err(VnscError::Config(format!("unknown configuration key `{key}`")));
    }
    let mut scenario = Scenario::Va;
    kv.update("scenario", &mut scenario)?;
    let mut model = match kv.get("preset").unwrap_or("standard") {
        "standard" => ModelConfig::standard(scenario),
        "miniature" => ModelConfig::miniature(scenario),
        other => return Err(VnscError::Config(format!("unknown preset `{other}`"))),
    };
    model.apply_kv(kv)?;
    let mut train = TrainConfig::for_scenario(scenario);
    train.apply_kv(kv)?;
    Ok((model, train))
}

fn read_configs(dir: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| VnscError::Format(format!("checkpoint config `{}`: {e}", path.display())))?;
    configs_from_kv(&KeyValues::parse(&text)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, OptimizerState, TrainConfig)> {
    let (model_cfg, train_cfg) = read_configs(dir)?;
    let model = Model::load(model_cfg, &dir.join(PARAMS_FILE))?;
    let opt = OptimizerState::load(&dir.join(OPTIMIZER_FILE))?;
    Ok((model, opt, train_cfg))
}

/// Model alone; the optimizer file need not exist.
pub fn load_model(dir: &Path) -> Result<Model> {
    let (model_cfg, _) = read_configs(dir)?;
    Model::load(model_cfg, &dir.join(PARAMS_FILE))
}
