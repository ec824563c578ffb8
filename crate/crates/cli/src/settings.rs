//! Flat `key = value` run settings with a record of where each value came
//! from. Later layers win: default, file, `VEGN_SEED`, command-line flag.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use vegn::dist::{PartitionKind, Transport};
use vegn::losses::LossConfig;
use vegn::model::{Backbone, ModelConfig, VirtualMessageMode};
use vegn::nbody::DatasetConfig;
use vegn::trainer::{AdamConfig, DistConfig, EvalConfig, RadiusMode, TrainConfig};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "VEGN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

/// Every recognised key with its default, in output order.
const KEYS: &[(&str, &str)] = &[
    // data
    ("data", "none"),
    ("particles", "30"),
    ("train_samples", "1000"),
    ("val_samples", "200"),
    ("test_samples", "200"),
    ("input_frame", "30"),
    ("delta_t", "10"),
    ("sim_dt", "0.001"),
    ("substeps", "10"),
    ("softening", "0.1"),
    // model
    ("backbone", "fast_egnn"),
    ("layers", "4"),
    ("hidden", "64"),
    ("virtual_nodes", "3"),
    ("drop_rate", "0"),
    ("message_mode", "per_pair"),
    ("share_coord_mlp", "false"),
    // loss
    ("mmd_weight", "0.03"),
    ("mmd_bandwidth", "1.5"),
    ("mmd_samples", "3"),
    // training
    ("seed", "0"),
    ("epochs", "2500"),
    ("patience", "200"),
    ("batch_size", "16"),
    ("eval_period", "1"),
    ("lr", "0.0005"),
    ("weight_decay", "1e-12"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    // distributed
    ("devices", "1"),
    ("partition", "random"),
    ("radius_mode", "fixed"),
    ("radius", "none"),
    ("transport", "inproc"),
    // evaluation
    ("rotations", "1"),
    ("reflections", "false"),
    ("translation", "0"),
];

#[derive(Clone, Debug)]
pub struct Settings {
    values: Vec<(String, Source)>,
}

fn index_of(key: &str) -> CliResult<usize> {
    KEYS.iter()
        .position(|(k, _)| *k == key)
        .ok_or_else(|| CliError::Config(format!("unknown setting `{key}`")))
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(_, d)| (d.to_string(), Source::Default)).collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> CliResult<()> {
        let i = index_of(key)?;
        self.values[i] = (value.trim().to_string(), source);
        Ok(())
    }

    pub fn source(&self, key: &str) -> CliResult<Source> {
        Ok(self.values[index_of(key)?].1)
    }

    pub fn raw(&self, key: &str) -> CliResult<&str> {
        Ok(&self.values[index_of(key)?].0)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|e| CliError::Config(format!("bad value `{raw}` for `{key}`: {e}")))
    }

    fn get_opt_f64(&self, key: &str) -> CliResult<Option<f64>> {
        match self.raw(key)? {
            "none" | "" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v, Source::File)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_env(&mut self) -> CliResult<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            v.trim()
                .parse::<u64>()
                .map_err(|e| CliError::Config(format!("{SEED_ENV}={v}: {e}")))?;
            self.set("seed", &v, Source::Env)?;
        }
        Ok(())
    }

    /// `key=value` overrides given on the command line.
    pub fn apply_pairs(&mut self, pairs: &[String]) -> CliResult<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("`--set {p}`: expected key=value")))?;
            self.set(k.trim(), v, Source::Flag)?;
        }
        Ok(())
    }

    pub fn flag<T: ToString>(&mut self, key: &str, value: &Option<T>) -> CliResult<()> {
        if let Some(v) = value {
            self.set(key, &v.to_string(), Source::Flag)?;
        }
        Ok(())
    }

    /// The resolved settings, one per line with their source.
    pub fn render(&self) -> String {
        let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for ((k, _), (v, s)) in KEYS.iter().zip(&self.values) {
            out.push_str(&format!("{k:<width$} = {v}  # {s}\n"));
        }
        out
    }

    pub fn dataset_config(&self) -> CliResult<DatasetConfig> {
        Ok(DatasetConfig {
            train: self.get("train_samples")?,
            val: self.get("val_samples")?,
            test: self.get("test_samples")?,
            particles: self.get("particles")?,
            input_frame: self.get("input_frame")?,
            delta_t: self.get("delta_t")?,
            dt: self.get("sim_dt")?,
            substeps: self.get("substeps")?,
            softening: self.get("softening")?,
            seed: self.get("seed")?,
        })
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let cfg = ModelConfig {
            backbone: self.get::<Backbone>("backbone")?,
            layers: self.get("layers")?,
            hidden: self.get("hidden")?,
            virtual_channels: self.get("virtual_nodes")?,
            drop_rate: self.get("drop_rate")?,
            message_mode: self.get::<VirtualMessageMode>("message_mode")?,
            share_coord_mlp: self.get("share_coord_mlp")?,
            ..ModelConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> CliResult<LossConfig> {
        Ok(LossConfig {
            mmd_weight: self.get("mmd_weight")?,
            bandwidth: self.get("mmd_bandwidth")?,
            mmd_samples: self.get("mmd_samples")?,
        })
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.get("epochs")?,
            patience: self.get("patience")?,
            batch_size: self.get("batch_size")?,
            eval_period: self.get("eval_period")?,
            seed: self.get("seed")?,
            adam: AdamConfig {
                lr: self.get("lr")?,
                beta1: self.get("beta1")?,
                beta2: self.get("beta2")?,
                eps: self.get("adam_eps")?,
                weight_decay: self.get("weight_decay")?,
            },
            loss: self.loss_config()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dist_config(&self) -> CliResult<DistConfig> {
        Ok(DistConfig {
            devices: self.get("devices")?,
            partition: self.get::<PartitionKind>("partition")?,
            radius_mode: self.get::<RadiusMode>("radius_mode")?,
            radius: self.get_opt_f64("radius")?,
            transport: self.get::<Transport>("transport")?,
        })
    }

    /// Whether the run was asked to go through the distributed runtime.
    pub fn distributed(&self) -> CliResult<bool> {
        Ok(self.source("devices")? != Source::Default)
    }

    pub fn eval_config(&self) -> CliResult<EvalConfig> {
        Ok(EvalConfig {
            rotations: self.get("rotations")?,
            seed: self.get("seed")?,
            reflections: self.get("reflections")?,
            translation: self.get("translation")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering() {
        let mut s = Settings::default();
        s.apply_text("seed = 4\nhidden = 8 # narrow\n\n", "f").unwrap();
        assert_eq!(s.raw("seed").unwrap(), "4");
        assert_eq!(s.source("hidden").unwrap(), Source::File);
        s.flag("hidden", &Some(16)).unwrap();
        assert_eq!(s.get::<usize>("hidden").unwrap(), 16);
        assert!(s.apply_text("bogus = 1", "f").is_err());
        assert!(s.apply_text("hidden 3", "f").is_err());
    }

    #[test]
    fn rendered_settings_read_back() {
        let mut s = Settings::default();
        s.set("drop_rate", "0.75", Source::Flag).unwrap();
        let mut t = Settings::default();
        t.apply_text(&s.render(), "resolved").unwrap();
        assert_eq!(t.raw("drop_rate").unwrap(), "0.75");
        assert_eq!(t.model_config().unwrap(), s.model_config().unwrap());
    }
}
