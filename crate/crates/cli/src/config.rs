use std::path::{Path, PathBuf};

use layerforge::expansion::{ExpansionParams, Strategy};
use layerforge::predictor::PredictorTrainConfig;
use layerforge::trainpipe::{FreezeMode, TrainConfig};
use layerforge::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        let p = layerforge::analysis::TsneParams::default();
        TsneConfig {
            perplexity: p.perplexity,
            iterations: p.iterations,
            learning_rate: p.learning_rate,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub extra_ckpts: Vec<PathBuf>,
    pub predictors: Option<PathBuf>,
}

/// Everything a subcommand may read, fully materialised into each run's
/// output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub init_std: f64,
    pub train: TrainConfig,
    pub predictor: PredictorTrainConfig,
    pub expansion: ExpansionParams,
    pub strategy: Option<Strategy>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// `None` means the strategy's own default.
    pub freeze: Option<FreezeMode>,
    pub family: String,
    pub use_svd: bool,
    pub holdout_frac: f64,
    pub eval_count: usize,
    pub eval_len: usize,
    pub tsne: TsneConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 0,
            model: ModelConfig::default(),
            init_std: 0.02,
            train: TrainConfig::default(),
            predictor: PredictorTrainConfig::default(),
            expansion: ExpansionParams::default(),
            strategy: None,
            strategies: vec![Strategy::Lesa, Strategy::Solar],
            seeds: vec![0, 1, 2],
            freeze: None,
            family: "all".into(),
            use_svd: true,
            holdout_frac: 0.0,
            eval_count: 500,
            eval_len: 128,
            tsne: TsneConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with the JSON file, if any. Unknown keys at any
    /// level are rejected.
    pub fn load(path: Option<&Path>, command: &str) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::for_command(command))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if !user.is_object() {
                return Err(Error::Config(format!("{}: top level must be an object", p.display())));
            }
            merge(&mut v, user);
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Defaults for one subcommand: from-scratch training uses the higher
    /// learning rate, everything else the continual-training one.
    pub fn for_command(command: &str) -> Self {
        let mut c = RunConfig {
            command: command.to_string(),
            ..Default::default()
        };
        if command == "train-toy" {
            c.train = TrainConfig::scratch();
        }
        c
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let p = dir.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(p)
    }
}
