//! `key = value` experiment configuration.
//!
//! Every command has a fixed key set with defaults. Values come from the
//! defaults, then the config file, then flag overrides; unknown keys are
//! rejected at each step.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use piba_core::featbn::FeatureBnConfig;
use piba_core::inputbn::{GanConfig, InputBnConfig};
use piba_core::models::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Attribute,
    EvalSensn,
    EvalInsdel,
    EvalRoar,
    EvalEhr,
    SanityCheck,
    Report,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::GenData,
        Command::Train,
        Command::Attribute,
        Command::EvalSensn,
        Command::EvalInsdel,
        Command::EvalRoar,
        Command::EvalEhr,
        Command::SanityCheck,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Attribute => "attribute",
            Command::EvalSensn => "eval-sensn",
            Command::EvalInsdel => "eval-insdel",
            Command::EvalRoar => "eval-roar",
            Command::EvalEhr => "eval-ehr",
            Command::SanityCheck => "sanity-check",
            Command::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| CliError::Config(format!("unknown command `{name}`")))
    }

    /// Keys accepted by this command with their default values.
    pub fn defaults(self) -> BTreeMap<&'static str, String> {
        let mut d = BTreeMap::new();
        let mut put = |k: &'static str, v: String| {
            d.insert(k, v);
        };
        let train = TrainConfig::default();
        let training = |put: &mut dyn FnMut(&'static str, String)| {
            put("epochs", train.epochs.to_string());
            put("lr", train.lr.to_string());
            put("batch_size", train.batch_size.to_string());
        };
        match self {
            Command::GenData => {
                put("kind", "patch".into());
                put("seed", "7".into());
                put("n_train", "300".into());
                put("n_val", "100".into());
                put("n_test", "100".into());
            }
            Command::Train => {
                put("data", String::new());
                put("seed", "0".into());
                training(&mut put);
            }
            Command::Attribute | Command::SanityCheck => {
                put("data", String::new());
                put("model", String::new());
                put("split", "test".into());
                put("index", "0".into());
                put("count", if self == Command::Attribute { "1" } else { "20" }.into());
                attribution_defaults(&mut put);
                if self == Command::Attribute {
                    put("heatmap_scale", "1".into());
                }
            }
            Command::EvalSensn => {
                put("data", String::new());
                put("model", String::new());
                put("maps", String::new());
                put("split", "test".into());
                put("seed", "0".into());
                put("k_sets", "200".into());
                put("n_values", "1,2,4,8,16,32,64,128".into());
                put("pct_values", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9".into());
            }
            Command::EvalInsdel => {
                put("data", String::new());
                put("model", String::new());
                put("maps", String::new());
                put("split", "test".into());
                put("batch", "10".into());
                put("blur_kernel", "5".into());
                put("blur_sigma", "2".into());
            }
            Command::EvalRoar => {
                put("data", String::new());
                put("maps", String::new());
                put("seed", "0".into());
                put("rates", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9".into());
                training(&mut put);
            }
            Command::EvalEhr => {
                put("data", String::new());
                put("maps", String::new());
                put("split", "test".into());
                put("n_thresholds", "101".into());
            }
            Command::Report => {}
        }
        d
    }
}

fn attribution_defaults(put: &mut dyn FnMut(&'static str, String)) {
    let f = FeatureBnConfig::default();
    let g = GanConfig::default();
    let i = InputBnConfig::default();
    put("method", "inputiba".into());
    put("seed", "0".into());
    put("layer", String::new());
    put("beta_feat", f.beta.to_string());
    put("feat_steps", f.steps.to_string());
    put("feat_lr", f.lr.to_string());
    put("feat_init_logit", f.init_logit.to_string());
    put("bank_size", "200".into());
    put("gan_epochs", g.epochs.to_string());
    put("gan_batch", g.batch_size.to_string());
    put("gen_lr", g.gen_lr.to_string());
    put("critic_lr", g.critic_lr.to_string());
    put("clip", g.clip.to_string());
    put("gen_steps_per_critic", g.gen_steps_per_critic.to_string());
    put("critic_warmup", g.critic_warmup.to_string());
    put("gan_init_logit", g.init_logit.to_string());
    put("jitter", g.jitter.to_string());
    put("beta_input", i.beta.to_string());
    put("input_steps", i.steps.to_string());
    put("input_lr", i.lr.to_string());
    put("input_init_logit", i.init_logit.to_string());
    put("noise_draws", i.noise_draws.to_string());
    put("ig_steps", "50".into());
}

/// A fully resolved configuration for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub command: Command,
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new(command: Command) -> Self {
        Config {
            command,
            values: command.defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key `{key}` for {}", self.command.name()))),
        }
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            self.set(k, v).map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// The resolved configuration as `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn str(&self, key: &str) -> CliResult<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Other(format!("{} has no key `{key}`", self.command.name())))
    }

    /// A non-empty value (paths and other required keys).
    pub fn required(&self, key: &str) -> CliResult<&str> {
        let v = self.str(key)?;
        if v.is_empty() {
            return Err(CliError::Config(format!("`{key}` is required for {}", self.command.name())));
        }
        Ok(v)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> CliResult<Vec<T>> {
        let v = self.str(key)?;
        if v.is_empty() {
            return Ok(vec![]);
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{s}`")))
            })
            .collect()
    }

    /// Checks that every value parses as the type its command expects.
    pub fn validate(&self) -> CliResult<()> {
        for (k, v) in &self.values {
            let ok = match k.as_str() {
                "kind" => matches!(v.as_str(), "patch" | "token"),
                "split" => matches!(v.as_str(), "train" | "val" | "test"),
                "method" => matches!(v.as_str(), "inputiba" | "iba" | "ig" | "random"),
                "data" | "model" | "maps" | "layer" => true,
                "n_values" => self.list::<usize>(k).is_ok(),
                "pct_values" | "rates" => self.list::<f64>(k).is_ok(),
                "seed" => v.parse::<u64>().is_ok(),
                _ => v.parse::<f64>().is_ok(),
            };
            if !ok {
                return Err(CliError::Config(format!("`{k}`: invalid value `{v}`")));
            }
        }
        Ok(())
    }
}
