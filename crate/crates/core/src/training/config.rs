use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::model::{LogRegConfig, ModelConfig};

/// Everything a training run needs, read from a flat `key = value` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub logreg: LogRegConfig,
}

fn put<T: DeserializeOwned>(slot: &mut T, key: &str, v: &toml::Value) -> Result<(), TrainError> {
    *slot = v.clone().try_into().map_err(|e: toml::de::Error| TrainError::config(key, e.message().to_owned()))?;
    Ok(())
}

fn val<T: Serialize>(x: &T) -> toml::Value {
    toml::Value::try_from(x).expect("plain value")
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        pub const KEYS: &'static [&'static str] = &[$($key),*];

        pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<(), TrainError> {
            match key {
                $($key => put(&mut self.$($field).+, key, v),)*
                "preset" => Err(TrainError::config(key, "preset may only appear in a config file")),
                _ => Err(TrainError::config(key, "unknown key")),
            }
        }

        pub fn entries(&self) -> Vec<(&'static str, toml::Value)> {
            vec![$(($key, val(&self.$($field).+))),*]
        }
    };
}

impl RunConfig {
    keys! {
        "embed_dim" => model.embed_dim;
        "memory_dim" => model.memory_dim;
        "dynamics" => model.dynamics;
        "decoder_depth" => model.decoder_depth;
        "embedding" => model.embedding;
        "attention" => model.attention;
        "attention_hidden" => model.attention_hidden;
        "taylor_order" => model.taylor_order;
        "penalty_weight" => model.penalty_weight;
        "uniform_time" => model.uniform_time;
        "keep_integrated_embedding" => model.keep_integrated_embedding;
        "leaky_slope" => model.leaky_slope;
        "gradient_mode" => model.gradient_mode;
        "rtol" => model.solver.rtol;
        "atol" => model.solver.atol;
        "max_steps" => model.solver.max_steps;
        "initial_step" => model.solver.initial_step;
        "lr_dynamics" => train.lr_dynamics;
        "lr_other" => train.lr_other;
        "decay_rate" => train.decay_rate;
        "batch_size" => train.batch_size;
        "epochs" => train.epochs;
        "seed" => train.seed;
        "eval_every" => train.eval_every;
        "logreg_l1" => logreg.l1;
        "logreg_l2" => logreg.l2;
        "logreg_max_iter" => logreg.max_iter;
        "logreg_tol" => logreg.tol;
    }

    /// Laptop-sized model and schedule.
    pub fn desk_scale() -> Self {
        Self { model: ModelConfig::desk_scale(), train: TrainConfig::desk_scale(), logreg: LogRegConfig::default() }
    }

    pub fn preset(name: &str) -> Result<Self, TrainError> {
        match name {
            "desk" => Ok(Self::desk_scale()),
            "full" => Ok(Self::default()),
            _ => Err(TrainError::config("preset", format!("unknown preset {name:?} (expected desk or full)"))),
        }
    }

    /// Parses a flat TOML document. An optional `preset` key picks the base
    /// values that the other keys then override.
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| TrainError::config("<file>", e.message().to_owned()))?;
        let mut cfg = match table.get("preset") {
            Some(toml::Value::String(p)) => Self::preset(p)?,
            Some(_) => return Err(TrainError::config("preset", "must be a string")),
            None => Self::default(),
        };
        for (k, v) in table.iter().filter(|(k, _)| k.as_str() != "preset") {
            if v.is_table() {
                return Err(TrainError::config(k, "nested tables are not supported; use flat keys"));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// Applies `key=value`, reading the value as TOML and falling back to a bare string.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<(), TrainError> {
        let v = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        self.set(key, &v)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate().map_err(|e| TrainError::config("model", e.to_string()))?;
        self.train.validate()
    }

    /// Flat TOML with every key, in declaration order.
    pub fn to_toml(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
