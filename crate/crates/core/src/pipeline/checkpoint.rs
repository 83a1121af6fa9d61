//! Checkpoint layout: `{root}/{stage}/{net}.tns` + `{net}.desc` for each net
//! present, and `{root}/{stage}/head.kv` with the head settings and stage.

use std::path::{Path, PathBuf};

use super::config::Stage;
use crate::cost::CostOptions;
use crate::error::{Error, Result};
use crate::io::KvFile;
use crate::nets::{HeadConfig, NetParams, StereoModel};

const NETS: [&str; 3] = ["feature", "adaptor", "aggregator"];

pub fn head_to_kv(head: &HeadConfig) -> KvFile {
    let mut kv = KvFile::new();
    kv.set("method", head.method);
    kv.set("d_max", head.d_max);
    kv.set("temperature", head.temperature);
    kv.set("laplace_scale", head.laplace_scale);
    kv.set("mu", head.mu);
    let l: Vec<String> = head.lambdas.iter().map(f64::to_string).collect();
    kv.set("lambdas", l.join(","));
    kv.set("orientation", head.orientation);
    kv.set("squared_l2", head.cost.squared_l2);
    kv.set("cost_eps", head.cost.eps);
    kv
}

pub fn head_from_kv(kv: &KvFile) -> Result<HeadConfig> {
    let mut h = HeadConfig::new(kv.require("method")?.parse()?, kv.parse_or("d_max", 0)?);
    h.temperature = kv.parse_or("temperature", h.temperature)?;
    h.laplace_scale = kv.parse_or("laplace_scale", h.laplace_scale)?;
    h.mu = kv.parse_or("mu", h.mu)?;
    h.lambdas = kv.parse_list("lambdas")?.unwrap_or(h.lambdas);
    h.orientation = kv.parse_or("orientation", h.orientation)?;
    h.cost = CostOptions {
        squared_l2: kv.parse_or("squared_l2", false)?,
        eps: kv.parse_or("cost_eps", h.cost.eps)?,
    };
    if h.d_max == 0 {
        return Err(Error::Config("checkpoint head has no d_max".into()));
    }
    Ok(h)
}

/// Writes the checkpoint and returns its directory.
pub fn save_checkpoint(root: impl AsRef<Path>, stage: Stage, model: &StereoModel) -> Result<PathBuf> {
    let dir = root.as_ref().join(stage.to_string());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, p) in NETS.iter().zip([&model.feature, &model.adaptor, &Some(model.aggregator.clone())]) {
        match p {
            Some(p) => p.save(&dir, name)?,
            None => {
                for ext in ["tns", "desc"] {
                    let f = dir.join(format!("{name}.{ext}"));
                    if f.exists() {
                        std::fs::remove_file(&f).map_err(|e| Error::io(&f, e))?;
                    }
                }
            }
        }
    }
    let mut kv = head_to_kv(&model.head);
    kv.set("stage", stage);
    kv.write(dir.join("head.kv"))?;
    Ok(dir)
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Stage, StereoModel)> {
    let dir = dir.as_ref();
    let kv = KvFile::read(dir.join("head.kv"))?;
    let stage: Stage = kv.require("stage")?.parse()?;
    let load = |name: &str| -> Result<Option<NetParams>> {
        if dir.join(format!("{name}.desc")).exists() {
            NetParams::load(dir, name).map(Some)
        } else {
            Ok(None)
        }
    };
    let model = StereoModel {
        feature: load("feature")?,
        adaptor: load("adaptor")?,
        aggregator: load("aggregator")?
            .ok_or_else(|| Error::Config(format!("{}: no aggregator", dir.display())))?,
        head: head_from_kv(&kv)?,
    };
    model.validate()?;
    Ok((stage, model))
}
