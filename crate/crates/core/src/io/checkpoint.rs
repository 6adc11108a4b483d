use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, read_tensor, write_json, write_tensor};
use crate::autodiff::{Adam, AdamConfig, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::model::UNet;
use crate::schedule::ScheduleParams;
use crate::training::{RunConfig, Trainer};

pub const CHECKPOINT_FORMAT: &str = "tdpaint-checkpoint/1";

/// Labels of the random streams a run draws from. Their state is a pure
/// function of `(seed, step)`, so the step counter is all a resumed run
/// needs to continue them.
fn rng_streams(config: &RunConfig) -> Vec<String> {
    ["init", "train/example", "train/noise", config.dataset.kind.name()].map(str::to_string).to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: RunConfig,
    pub schedule: ScheduleParams,
    pub step: u64,
    pub optimizer: AdamConfig,
    pub rng_streams: Vec<String>,
    pub parameters: Vec<String>,
}

/// Model weights plus the state needed to continue training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub net: UNet,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self { config: t.config, step: t.step(), net: t.net.clone(), optimizer: t.optimizer.clone() }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::resume(self.config, self.net, self.optimizer)
    }
}

fn tensor_path(dir: &Path, group: &str, name: &str) -> std::path::PathBuf {
    dir.join(group).join(format!("{name}.tens"))
}

/// Writes `manifest.json`, `weights/<name>.tens` and Adam moments under
/// `optim/m` and `optim/v`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let params = ckpt.net.params();
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: ckpt.config,
        schedule: ckpt.config.schedule,
        step: ckpt.step,
        optimizer: ckpt.optimizer.config,
        rng_streams: rng_streams(&ckpt.config),
        parameters: params.names().map(str::to_string).collect(),
    };
    for (name, t) in params.iter() {
        write_tensor(&tensor_path(dir, "weights", name), t)?;
    }
    for (group, moments) in [("optim/m", ckpt.optimizer.first_moments()), ("optim/v", ckpt.optimizer.second_moments())] {
        for (name, t) in moments {
            write_tensor(&tensor_path(dir, group, name), t)?;
        }
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let bytes = read_bytes(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&manifest_path, format!("unsupported format `{}`", manifest.format)));
    }
    let mut params = Parameters::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for name in &manifest.parameters {
        params.insert(name.clone(), read_tensor(&tensor_path(dir, "weights", name))?);
        let load = |group: &str| -> Result<Tensor> { read_tensor(&tensor_path(dir, group, name)) };
        first.insert(name.clone(), load("optim/m")?);
        second.insert(name.clone(), load("optim/v")?);
    }
    let net = UNet::from_parameters(manifest.config.model, params)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let optimizer = Adam::from_state(manifest.optimizer, manifest.step, first, second);
    Ok(Checkpoint { config: manifest.config, step: manifest.step, net, optimizer })
}
